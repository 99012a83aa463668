fn main() {
    std::process::exit(lacune_cli::dispatch(std::env::args_os()));
}
