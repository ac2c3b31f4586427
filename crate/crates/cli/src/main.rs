fn main() {
    std::process::exit(deepiv_cli::dispatch(std::env::args_os()));
}
