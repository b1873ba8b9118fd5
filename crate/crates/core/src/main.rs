fn main() {
    std::process::exit(drscale::cli::main_with_args(std::env::args_os()));
}
