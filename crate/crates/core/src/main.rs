fn main() {
    std::process::exit(esl_audit::cli::run(std::env::args_os()));
}
