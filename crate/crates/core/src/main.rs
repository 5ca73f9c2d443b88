fn main() {
    std::process::exit(zoro_mpc::cli::main_with_args(std::env::args_os()));
}
