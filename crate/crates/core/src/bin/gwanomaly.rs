fn main() {
    std::process::exit(gwanomaly::cli::run(std::env::args_os()));
}
