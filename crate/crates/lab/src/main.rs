fn main() {
    std::process::exit(lesion_synth::cli::run_from(std::env::args_os()));
}
