fn main() {
    std::process::exit(lex_core::cli::run(std::env::args_os()));
}
