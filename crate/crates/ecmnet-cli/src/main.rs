fn main() {
    std::process::exit(ecmnet::cli::run_from_env());
}
