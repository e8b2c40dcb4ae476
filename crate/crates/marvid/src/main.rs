fn main() {
    if let Err(e) = marvid::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
