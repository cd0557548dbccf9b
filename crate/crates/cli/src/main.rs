fn main() {
    std::process::exit(attnprobe_cli::run(std::env::args_os()));
}
