fn main() {
    std::process::exit(ctxmatch::cli::run(std::env::args_os()));
}
