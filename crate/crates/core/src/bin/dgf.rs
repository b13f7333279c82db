fn main() -> std::process::ExitCode {
    dgfusion::cli::dgf_main()
}
