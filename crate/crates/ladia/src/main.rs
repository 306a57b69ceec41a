fn main() {
    if let Err(err) = ladia::commands::run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
