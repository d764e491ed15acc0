use clap::Parser;

use answerme::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(msg) => println!("{}", msg.trim_end()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.class().exit_code());
        }
    }
}
