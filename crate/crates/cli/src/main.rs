fn main() -> std::process::ExitCode {
    nudiff_cli::cli::main()
}
