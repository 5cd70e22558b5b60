fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(abpe::cli::main_with_args(&args));
}
