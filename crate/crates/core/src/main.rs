fn main() -> std::process::ExitCode {
    metacl::cli::main_from_args()
}
