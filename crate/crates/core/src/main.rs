fn main() -> std::process::ExitCode {
    collis::cli::main()
}
