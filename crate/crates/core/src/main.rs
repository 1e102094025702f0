fn main() -> std::process::ExitCode {
    fieldnet::cli::main()
}
