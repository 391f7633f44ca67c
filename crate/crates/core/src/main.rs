fn main() {
    std::process::exit(dsurf::cli::run(std::env::args_os()));
}
