fn main() {
    std::process::exit(attrib_core::cli::main_with(std::env::args_os()));
}
