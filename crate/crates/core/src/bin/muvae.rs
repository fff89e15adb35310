fn main() {
    std::process::exit(muvae::cli::run(std::env::args_os()));
}
