fn main() {
    std::process::exit(macgic_cli::main_with_args(std::env::args_os()));
}
