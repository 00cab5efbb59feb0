fn main() { std::process::exit(latentface::cli::main()) }
