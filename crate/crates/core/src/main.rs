fn main() {
    std::process::exit(emucal::cli::dispatch(std::env::args_os()));
}
