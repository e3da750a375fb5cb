fn main() {
    let (code, out) = simplex_attn::cli::run_args(std::env::args_os());
    print!("{out}");
    std::process::exit(code);
}
