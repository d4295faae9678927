fn main() {
    std::process::exit(cryorecon::cli::run(std::env::args_os()));
}
