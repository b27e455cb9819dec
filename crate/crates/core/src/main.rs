fn main() {
    std::process::exit(ddpm::cli::main());
}
