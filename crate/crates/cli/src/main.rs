fn main() {
    std::process::exit(hjbctl::run(std::env::args_os()));
}
