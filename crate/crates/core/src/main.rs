fn main() {
    std::process::exit(sslcl::cli::run(std::env::args_os()));
}
