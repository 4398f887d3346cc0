fn main() {
    std::process::exit(jiang_cli::dispatch(std::env::args_os()));
}
