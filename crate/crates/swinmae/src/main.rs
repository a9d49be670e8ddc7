use clap::Parser;

use swinmae::cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version print normally and exit 0.
            if e.use_stderr() {
                let first = e.to_string();
                let line = first.lines().next().unwrap_or("bad arguments");
                eprintln!("error: usage: {line}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        let kind = match e.exit_code() {
            1 => "usage",
            3 => "numerical",
            _ => "data",
        };
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {kind}: {msg}");
        std::process::exit(e.exit_code());
    }
}
