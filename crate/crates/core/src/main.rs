fn main() {
    std::process::exit(seqdream::harness::cli_main(std::env::args_os()));
}
