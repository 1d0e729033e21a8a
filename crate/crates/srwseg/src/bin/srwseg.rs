fn main() {
    std::process::exit(srwseg::cli::run(std::env::args_os()));
}
