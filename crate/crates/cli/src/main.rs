fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(rsl_cli::run(&argv));
}
