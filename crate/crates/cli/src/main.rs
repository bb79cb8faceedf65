use std::io;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = sciedkit::cli::run(&args, &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
