fn main() {
    std::process::exit(partproto::cli::run(std::env::args_os()));
}
