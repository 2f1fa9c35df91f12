fn main() {
    std::process::exit(protodetect::cli::run(std::env::args_os()));
}
