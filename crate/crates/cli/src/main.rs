fn main() {
    std::process::exit(markertrack_cli::main_with(std::env::args_os()));
}
