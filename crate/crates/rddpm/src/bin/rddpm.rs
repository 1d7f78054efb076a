fn main() -> std::process::ExitCode {
    rddpm::cli::main()
}
