fn main() {
    std::process::exit(onestep_sr::cli::run(std::env::args_os()));
}
