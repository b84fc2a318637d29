fn main() {
    let code = ezgzl::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
