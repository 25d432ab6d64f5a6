fn main() {
    std::process::exit(fewstep_cli::dispatch(std::env::args_os()));
}
