fn main() {
    std::process::exit(patchsae_cli::run(std::env::args_os()));
}
