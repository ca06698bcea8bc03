fn main() {
    std::process::exit(eatnas::cli::run(std::env::args_os()));
}
