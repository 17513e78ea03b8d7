fn main() {
    std::process::exit(tscf::cli::run(std::env::args_os()));
}
