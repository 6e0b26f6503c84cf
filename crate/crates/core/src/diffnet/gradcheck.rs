use rand::Rng;

use super::*;
use crate::rng::seeded;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Contracts a non-scalar output with fixed random weights.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let (r, c) = tape.dims(out);
    let mut rng = seeded(seed);
    let w = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = tape.mul_const(out, w).unwrap();
    tape.sum(y)
}

fn eval(inputs: &[(usize, usize, Vec<f64>)], build: &Build) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(r, c, d)| tape.variable(*r, *c, d.clone()).unwrap())
        .collect();
    let out = build(&mut tape, &vars);
    let loss = contract(&mut tape, out, 77);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    let grads = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    (tape.scalar(loss), grads)
}

fn check(inputs: Vec<(usize, usize, Vec<f64>)>, build: &Build) {
    let (_, analytic) = eval(&inputs, build);
    let h = 1e-5;
    for (i, (r, c, data)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus = inputs.clone();
            plus[i].2[j] += h;
            let mut minus = inputs.clone();
            minus[i].2[j] -= h;
            let fd = (eval(&plus, build).0 - eval(&minus, build).0) / (2.0 * h);
            let a = analytic[i][j];
            assert!(
                (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-7,
                "input {i} ({r}x{c}) elem {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn rand_mat(seed: u64, r: usize, c: usize, lo: f64, hi: f64) -> (usize, usize, Vec<f64>) {
    let mut rng = seeded(seed);
    (r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

#[test]
fn matmul_and_broadcasts() {
    check(vec![rand_mat(1, 3, 4, -1.0, 1.0), rand_mat(2, 4, 2, -1.0, 1.0)], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check(vec![rand_mat(3, 3, 4, -1.0, 1.0), rand_mat(4, 1, 4, -1.0, 1.0)], &|t, v| t.add_row(v[0], v[1]).unwrap());
    check(vec![rand_mat(5, 3, 4, -1.0, 1.0), rand_mat(6, 3, 1, -1.0, 1.0)], &|t, v| t.add_col(v[0], v[1]).unwrap());
    check(vec![rand_mat(7, 3, 4, -1.0, 1.0), rand_mat(8, 3, 1, -1.0, 1.0)], &|t, v| t.mul_col(v[0], v[1]).unwrap());
    check(vec![rand_mat(9, 3, 1, -1.0, 1.0)], &|t, v| t.broadcast_col(v[0], 5).unwrap());
}

#[test]
fn elementwise_binary() {
    let a = rand_mat(10, 2, 3, -2.0, 2.0);
    let b = rand_mat(11, 2, 3, -2.0, 2.0);
    check(vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]).unwrap());
    check(vec![a, b], &|t, v| t.logaddexp(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_unary() {
    // keep away from the relu kink and the clamp threshold
    let a = (2, 4, vec![-1.5, -0.7, 0.4, 1.3, 2.2, -2.1, 0.9, -0.3]);
    check(vec![a.clone()], &|t, v| t.relu(v[0]));
    check(vec![a.clone()], &|t, v| t.sigmoid(v[0]));
    check(vec![a.clone()], &|t, v| t.exp(v[0]));
    check(vec![a.clone()], &|t, v| t.softplus(v[0]));
    check(vec![a.clone()], &|t, v| t.neg(v[0]));
    check(vec![a.clone()], &|t, v| t.scale(v[0], -1.7));
    check(vec![a.clone()], &|t, v| t.add_scalar(v[0], 3.0));
    check(vec![a.clone()], &|t, v| t.clamp_min(v[0], 0.0));
    check(vec![a.clone()], &|t, v| t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -0.2, 0.7]).unwrap());
    check(vec![a], &|t, v| t.add_const(v[0], &[1.0; 8]).unwrap());
    check(vec![rand_mat(12, 2, 3, 0.2, 3.0)], &|t, v| t.log(v[0]));
}

#[test]
fn row_reductions() {
    let a = rand_mat(13, 3, 5, -3.0, 3.0);
    check(vec![a.clone()], &|t, v| t.softmax_rows(v[0]));
    check(vec![a.clone()], &|t, v| t.log_softmax_rows(v[0]));
    check(vec![a.clone()], &|t, v| t.logsumexp_rows(v[0]));
    let mask = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    check(vec![a.clone()], &move |t, v| t.masked_logsumexp_rows(v[0], mask.clone()).unwrap());
    check(vec![a.clone()], &|t, v| t.sum(v[0]));
    check(vec![a.clone()], &|t, v| t.sum_rows(v[0]));
    check(vec![a.clone()], &|t, v| t.gather(v[0], vec![4, 0, 2]).unwrap());
    check(vec![a.clone()], &|t, v| t.repeat_rows(v[0], 3));
    check(vec![a], &|t, v| t.reshape(v[0], 5, 3).unwrap());
}

#[test]
fn composite_network_loss() {
    // two-layer relu net with cross-entropy
    check(
        vec![
            rand_mat(20, 4, 3, -1.0, 1.0),
            rand_mat(21, 3, 6, -1.0, 1.0),
            rand_mat(22, 1, 6, -0.5, 0.5),
            rand_mat(23, 6, 2, -1.0, 1.0),
        ],
        &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row(h, v[2]).unwrap();
            let h = t.relu(h);
            let o = t.matmul(h, v[3]).unwrap();
            let lp = t.log_softmax_rows(o);
            let picked = t.gather(lp, vec![0, 1, 1, 0]).unwrap();
            t.sum(picked)
        },
    );
}

#[test]
fn straight_through_routes_gradient_to_relaxed() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(1, 3, vec![0.2, -0.4, 1.0]).unwrap();
    let r = tape.sigmoid(x);
    let st = tape.straight_through(vec![1.0, 0.0, 1.0], r).unwrap();
    assert_eq!(tape.value(st), &[1.0, 0.0, 1.0]);
    let s = tape.sum(st);
    tape.backward(s, &mut ParamStore::new()).unwrap();
    let g = tape.grad(x).unwrap();
    for (gi, xi) in g.iter().zip([0.2f64, -0.4, 1.0]) {
        let s = 1.0 / (1.0 + (-xi).exp());
        assert!((gi - s * (1.0 - s)).abs() < 1e-12);
    }
}

#[test]
fn backward_rules() {
    let mut store = ParamStore::<f64>::new();
    let p = store.insert("p", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
    let q = store.insert("unused", Tensor::scalar(4.0)).unwrap();

    let mut tape = Tape::new();
    let pv = tape.param(&store, p, true);
    let s = tape.sum(pv);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.tensor(p).grad().unwrap(), &[1.0; 4]);
    assert_eq!(store.tensor(q).grad().unwrap(), &[0.0]);

    store.zero_grad();
    let mut tape = Tape::new();
    let pv = tape.param(&store, p, true);
    let sq = tape.mul(pv, pv).unwrap();
    let half = tape.scale(sq, 0.5);
    let l = tape.sum(half);
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.tensor(p).grad().unwrap(), store.tensor(p).data());

    let err = tape.backward(pv, &mut store).unwrap_err();
    assert!(matches!(err, crate::error::LexError::Contract(_)));
}

#[test]
fn identical_seeds_give_bit_identical_training() {
    let run = || {
        let mut rng = seeded(42);
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::init(MlpSpec::new(3, vec![8], 2, OutputActivation::Softmax), "f", &mut store, &mut rng).unwrap();
        let x: Vec<f32> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..20 {
            store.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.constant(10, 3, x.clone()).unwrap();
            let o = mlp.forward_logits(&mut tape, &store, xv, true).unwrap();
            let lp = tape.log_softmax_rows(o);
            let g = tape.gather(lp, (0..10).map(|i| i % 2).collect()).unwrap();
            let l = tape.sum(g);
            let l = tape.neg(l);
            tape.backward(l, &mut store).unwrap();
            store.adam_step(&AdamConfig::default()).unwrap();
        }
        store.checksum("")
    };
    assert_eq!(run(), run());
}
