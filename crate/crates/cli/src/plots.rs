//! Gnuplot scripts for the CSV outputs of each command.

use std::path::Path;

use crate::config::Command;

fn file_name(base: &str, table: Option<&str>) -> String {
    let name = match table {
        None => format!("{base}.csv"),
        Some(t) => format!("{base}.{t}.csv"),
    };
    // scripts sit next to the data
    Path::new(&name)
        .file_name()
        .map_or(name.clone(), |n| n.to_string_lossy().into_owned())
}

/// Script rendering every figure type of a command into `<base>.png` files.
pub fn gnuplot_script(command: Command, base: &str) -> String {
    let main = file_name(base, None);
    let stem = Path::new(base)
        .file_name()
        .map_or(base.to_string(), |n| n.to_string_lossy().into_owned());
    let mut s = String::from(
        "set datafile separator ','\nset datafile missing 'NaN'\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n",
    );
    let out = |suffix: &str| format!("set output '{stem}{suffix}.png'\n");
    match command {
        Command::Trajectory => {
            s += &out("");
            s += &format!("set xlabel 'tau'\nset ylabel 'x'\nplot '{main}' using 'tau':'x' with lines title 'x'\n");
            s += &out(".phase");
            s += &format!(
                "set xlabel 'x'\nset ylabel 'p'\nplot '{main}' using 'x':'p' with lines notitle, \\\n     '{}' using 'x':'p' with points pt 7 ps 0.5 title 'section'\n",
                file_name(base, Some("section"))
            );
        }
        Command::FixedPoints => {
            s += &out("");
            s += &format!("set xlabel 'index'\nset ylabel '|alpha|^2'\nplot '{main}' using 'index':'photon_number' with points pt 7 notitle\n");
        }
        Command::Ansatz => {
            s += &out("");
            s += &format!(
                "set xlabel 'Delta'\nset ylabel 'A'\nplot '{main}' using 'detuning':'amplitude' with points pt 7 ps 0.6 title 'ansatz', \\\n     '{}' using 'detuning':'sim_amplitude' with points pt 6 title 'simulation'\n",
                file_name(base, Some("compare"))
            );
        }
        Command::Lyapunov => {
            s += &out("");
            s += &format!("set style fill solid\nset ylabel 'lambda_max'\nplot '{main}' using 0:'lambda_max':'stderr':xticlabels(1) with yerrorbars pt 7 notitle\n");
        }
        Command::Bifurcation => {
            s += &out("");
            s += &format!("set xlabel 'Delta'\nset ylabel 'maxima of x'\nplot '{main}' using 'detuning':'maximum' with dots notitle\n");
            s += &out(".lyapunov");
            s += &format!(
                "set ylabel 'lambda_max'\nplot '{}' using 'detuning':'lambda_max' with linespoints pt 7 ps 0.4 notitle\n",
                file_name(base, Some("points"))
            );
        }
        Command::PhaseDiagram => {
            s += &out("");
            s += &format!(
                "set xlabel 'Delta'\nset ylabel 'P'\nset cblabel 'class (0 stationary, n periodic, 99 chaotic)'\nplot '{main}' using 'detuning':'pump':'code' with points pt 5 ps 1 palette notitle, \\\n     '{}' using 'detuning':'pump' with points pt 7 ps 0.3 lc 'black' title 'boundaries'\n",
                file_name(base, Some("boundaries"))
            );
        }
        Command::Spectrum => {
            s += &out("");
            s += &format!(
                "set logscale y\nset xlabel 'nu / Omega'\nset ylabel 'S(nu)'\nplot '{main}' using 'frequency':'power' with lines notitle, \\\n     '{}' using 'frequency':'power' with points pt 6 title 'lines'\n",
                file_name(base, Some("lines"))
            );
        }
        Command::QsdTrajectory => {
            s += &out("");
            s += &format!("set xlabel 'tau'\nset ylabel 'x'\nplot '{main}' using 'tau':'x' with lines title 'QSD', '' using 'tau':'sc_x' with lines title 'SC'\n");
            s += &out(".section");
            s += &format!(
                "set xlabel 'x'\nset ylabel 'p'\nplot '{}' using 'x':'p' with points pt 7 ps 0.5 notitle\n",
                file_name(base, Some("section"))
            );
        }
        Command::QsdEnsemble => {
            s += &out("");
            s += &format!("set xlabel 'tau'\nset ylabel '<x>'\nplot '{main}' using 'tau':'x':'x_se' with yerrorlines title 'ensemble', '' using 'tau':'sc_x' with lines title 'SC'\n");
        }
        Command::OracleCheck => {
            s += &out("");
            s += &format!(
                "set xlabel 'tau'\nset ylabel 'z-score'\nplot '{main}' using 'tau':'z' with points pt 7 ps 0.5 notitle, 3 lc 'red' notitle, -3 lc 'red' notitle\n"
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_command_has_a_script() {
        for c in Command::ALL {
            let s = gnuplot_script(c, "out/run");
            assert!(s.contains("'run.csv'"), "{c}: {s}");
            assert!(s.contains("set output 'run.png'"), "{c}");
        }
    }
}
