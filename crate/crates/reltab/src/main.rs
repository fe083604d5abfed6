fn main() {
    std::process::exit(reltab::cli::run(std::env::args_os()));
}
