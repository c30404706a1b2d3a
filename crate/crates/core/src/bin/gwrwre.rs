fn main() {
    std::process::exit(gwrwre::cli::main_with(std::env::args_os()));
}
