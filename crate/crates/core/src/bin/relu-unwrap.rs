fn main() {
    std::process::exit(relu_unwrap::cli::main_from_env());
}
