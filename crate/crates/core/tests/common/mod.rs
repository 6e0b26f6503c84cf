#![allow(dead_code)]

use lex_core::imputers::Imputer;
use lex_core::lexmodel::{LexModel, RunConfig};
use lex_core::rng::seeded;
use lex_core::synthgen::N_FEATURES;
use serde_json::json;

/// Config of a model whose selector reproduces the S3 ground truth.
pub fn oracle_config() -> RunConfig {
    RunConfig::from_value(json!({
        "preset": "lex-gaussian",
        "imputer": {"kind": "constant", "c": 0.0},
        "model": {"predictor_hidden": [8], "selector_hidden": [2]},
    }))
    .unwrap()
}

/// Two hidden units read the sign of feature 11; the output layer turns
/// them into huge logits on the active branch and on feature 11 itself.
pub fn oracle_model() -> LexModel<f32> {
    let cfg = oracle_config();
    let d = N_FEATURES;
    let mode = cfg.selection.mask_mode(d).unwrap();
    let mut m = LexModel::<f32>::init(&cfg.model, d, 2, mode, cfg.estimator.tau, Imputer::Constant { c: 0.0 }, &mut seeded(0)).unwrap();
    let set = |m: &mut LexModel<f32>, name: &str, data: Vec<f32>| {
        let id = m.store.find(name).unwrap();
        m.store.tensor_mut(id).data_mut().copy_from_slice(&data);
    };
    // hidden: h0 = relu(1e4 x11), h1 = relu(-1e4 x11)
    let mut w0 = vec![0.0; d * 2];
    w0[10 * 2] = 1e4;
    w0[10 * 2 + 1] = -1e4;
    set(&mut m, "selector.l0.weight", w0);
    set(&mut m, "selector.l0.bias", vec![0.0; 2]);
    let mut w1 = vec![0.0; 2 * d];
    let mut b1 = vec![-1e4; d];
    for j in 2..6 {
        w1[d + j] = 1e4; // h1 (x11 < 0) → branch B
        b1[j] = -5e3;
    }
    for j in 6..10 {
        w1[j] = 1e4; // h0 (x11 ≥ 0) → branch C
        b1[j] = -5e3;
    }
    b1[10] = 1e4;
    set(&mut m, "selector.l1.weight", w1);
    set(&mut m, "selector.l1.bias", b1);
    m
}
