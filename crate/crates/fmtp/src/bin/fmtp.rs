fn main() {
    std::process::exit(fmtp::cli::run());
}
