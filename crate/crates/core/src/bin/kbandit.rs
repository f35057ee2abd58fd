fn main() {
    std::process::exit(kbandit::cli::main_from_env());
}
