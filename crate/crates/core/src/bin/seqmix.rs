fn main() {
    std::process::exit(seqmix::cli::run(std::env::args_os()));
}
