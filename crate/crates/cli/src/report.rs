use std::io::{self, Write};

use taskreg_core::verify::{run_suite, Check, Suite};

use crate::{Failure, EXIT_FAILURE};

/// ANSI colour unless `NO_COLOR` is set to a non-empty value.
fn use_color() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty())
}

fn status(pass: bool, color: bool) -> String {
    match (pass, color) {
        (true, true) => "\x1b[32mPASS\x1b[0m".into(),
        (false, true) => "\x1b[31mFAIL\x1b[0m".into(),
        (true, false) => "PASS".into(),
        (false, false) => "FAIL".into(),
    }
}

pub fn render(checks: &[Check], color: bool, out: &mut impl Write) -> io::Result<()> {
    let w_suite = checks.iter().map(|c| c.suite.as_str().len()).max().unwrap_or(5).max(5);
    let w_name = checks.iter().map(|c| c.name.chars().count()).max().unwrap_or(5).max(5);
    writeln!(
        out,
        "{:<w_suite$}  {:<w_name$}  {:>12}  {:>12}  status",
        "suite", "check", "measured", "tolerance"
    )?;
    writeln!(out, "{}", "-".repeat(w_suite + w_name + 40))?;
    for c in checks {
        let pad = w_name - c.name.chars().count();
        writeln!(
            out,
            "{:<w_suite$}  {}{}  {:>12.3e}  {:>12}  {}",
            c.suite.as_str(),
            c.name,
            " ".repeat(pad),
            c.measured,
            c.bound.to_string(),
            status(c.pass, color)
        )?;
    }
    Ok(())
}

pub fn cmd_verify(suites: &[Suite]) -> Result<(), Failure> {
    let color = use_color();
    let mut all = Vec::new();
    for &s in suites {
        log::info!("running {s}: {}", s.description());
        all.extend(run_suite(s));
    }
    let mut stdout = io::stdout().lock();
    render(&all, color, &mut stdout).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    let failed = all.iter().filter(|c| !c.pass).count();
    let _ = writeln!(stdout, "\n{} checks, {} failed", all.len(), failed);
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_FAILURE,
            format!("{failed} verification check(s) failed"),
        ))
    }
}
