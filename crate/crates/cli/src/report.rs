use std::fmt;
use std::time::Duration;

use mnc::cascade::LossReport;

/// Summary printed to stderr at the end of every run, failed ones included.
#[derive(Debug, Default)]
pub struct RunReport {
    pub subcommand: String,
    /// TOML echo of the configuration in effect.
    pub config: Option<String>,
    pub iterations: usize,
    pub first_loss: Option<LossReport>,
    pub last_loss: Option<LossReport>,
    /// Wall-clock time per named segment.
    pub segments: Vec<(String, Duration)>,
    pub status: i32,
    pub error: Option<String>,
}

impl RunReport {
    pub fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            ..Self::default()
        }
    }

    pub fn time(&mut self, name: &str, d: Duration) {
        match self.segments.iter_mut().find(|(n, _)| n == name) {
            Some((_, total)) => *total += d,
            None => self.segments.push((name.to_string(), d)),
        }
    }

    pub fn record_loss(&mut self, loss: &LossReport) {
        self.iterations += 1;
        self.first_loss.get_or_insert(*loss);
        self.last_loss = Some(*loss);
    }
}

fn loss_line(l: &LossReport) -> String {
    format!("L1 {:.6} L2 {:.6} L3 {:.6} total {:.6}", l.l1, l.l2, l.l3, l.total)
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "--- run report ---")?;
        writeln!(f, "subcommand: {}", self.subcommand)?;
        if let Some(cfg) = &self.config {
            writeln!(f, "config:")?;
            for line in cfg.lines() {
                writeln!(f, "  {line}")?;
            }
        }
        if self.iterations > 0 {
            writeln!(f, "iterations: {}", self.iterations)?;
        }
        if let Some(l) = &self.first_loss {
            writeln!(f, "first loss: {}", loss_line(l))?;
        }
        if let Some(l) = &self.last_loss {
            writeln!(f, "last loss: {}", loss_line(l))?;
        }
        for (name, d) in &self.segments {
            writeln!(f, "time {name}: {:.3}s", d.as_secs_f64())?;
        }
        if let Some(e) = &self.error {
            writeln!(f, "error: {e}")?;
        }
        write!(f, "status: {}", self.status)
    }
}
