fn main() {
    std::process::exit(degrid_cli::run(std::env::args_os()));
}
