use std::process::ExitCode;

fn main() -> ExitCode {
    let code = match graffiti_cli::parse(std::env::args_os().skip(1)) {
        Ok(cmd) => graffiti_cli::execute(&cmd),
        Err(e) => {
            let code = e.exit_code();
            match e {
                graffiti_cli::CliError::Clap(c) => {
                    let _ = c.print();
                }
                other => eprintln!("graffiti: {other}"),
            }
            code
        }
    };
    ExitCode::from(code as u8)
}
