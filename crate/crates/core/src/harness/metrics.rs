//! Metrics series as CSV.

use std::io::{BufRead, Write};

use crate::harness::HarnessError;
use crate::sim::Sample;

pub const CSV_HEADER: &str = "t_emulated,completed_items,connected_workers,warm_workers";

pub fn write_csv<W: Write>(samples: &[Sample], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for s in samples {
        writeln!(
            w,
            "{:.3},{},{},{}",
            s.t_emulated, s.completed_items, s.connected_workers, s.warm_workers
        )?;
    }
    Ok(())
}

pub fn csv_string(samples: &[Sample]) -> String {
    let mut out = Vec::new();
    write_csv(samples, &mut out).expect("writing to a Vec");
    String::from_utf8(out).expect("ascii")
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<Sample>, HarnessError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| HarnessError::Csv("empty file".into()))??;
    if header.trim() != CSV_HEADER {
        return Err(HarnessError::Csv(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| HarnessError::Csv(format!("line {}: bad {what}", n + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad("field count"));
        }
        out.push(Sample {
            t_emulated: f[0].parse().map_err(|_| bad("t_emulated"))?,
            completed_items: f[1].parse().map_err(|_| bad("completed_items"))?,
            connected_workers: f[2].parse().map_err(|_| bad("connected_workers"))?,
            warm_workers: f[3].parse().map_err(|_| bad("warm_workers"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact_and_round_trips() {
        let s = vec![
            Sample {
                t_emulated: 0.0,
                completed_items: 0,
                connected_workers: 20,
                warm_workers: 0,
            },
            Sample {
                t_emulated: 12.5,
                completed_items: 100,
                connected_workers: 20,
                warm_workers: 3,
            },
        ];
        let text = csv_string(&s);
        assert!(text.starts_with("t_emulated,completed_items,connected_workers,warm_workers\n"));
        assert_eq!(read_csv(text.as_bytes()).unwrap(), s);
        assert!(read_csv("a,b\n".as_bytes()).is_err());
        assert!(read_csv(format!("{CSV_HEADER}\n1,2,3\n").as_bytes()).is_err());
    }
}
