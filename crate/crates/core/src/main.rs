fn main() {
    std::process::exit(atomnas::cli::run(std::env::args_os()));
}
