fn main() {
    if let Err(e) = tinydenoise::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
