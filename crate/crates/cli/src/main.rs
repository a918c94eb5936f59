fn main() {
    std::process::exit(twopps_cli::main_with(std::env::args_os()));
}
