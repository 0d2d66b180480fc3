fn main() {
    std::process::exit(f2at::cli::dispatch(std::env::args_os()));
}
