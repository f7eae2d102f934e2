fn main() {
    eprintln!("bellmoment: not yet wired");
    std::process::exit(2);
}
