fn main() {
    let code = adventure_server::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
