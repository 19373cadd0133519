use clap::Parser;

fn main() {
    let cli = iedit::cli::Cli::parse();
    match iedit::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(1);
        }
    }
}
