fn main() {
    if let Err(e) = nplda::cli::run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
