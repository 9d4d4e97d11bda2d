fn main() {
    std::process::exit(xtqa::cli::run(std::env::args_os()));
}
