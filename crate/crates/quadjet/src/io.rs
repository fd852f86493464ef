//! Event CSV files.
//!
//! Fixed 19-column schema with the exact header
//! `pt1,eta1,phi1,m1,...,pt4,eta4,phi4,m4,weight,channel,truth`.
//! Floats are written in shortest round-trip decimal form; `channel` is
//! `3b`/`4b` and `truth` is `bkg`/`sig`/`na`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::event::{Channel, Event, Jet, Truth};

pub const EVENT_CSV_HEADER: &str = "pt1,eta1,phi1,m1,pt2,eta2,phi2,m2,pt3,eta3,phi3,m3,pt4,eta4,phi4,m4,weight,channel,truth";

pub fn write_events_csv(path: &Path, events: &[Event]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: &str| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))
    };
    emit(EVENT_CSV_HEADER)?;
    for event in events {
        let mut fields = Vec::with_capacity(19);
        for jet in &event.jets {
            fields.push(jet.pt.to_string());
            fields.push(jet.eta.to_string());
            fields.push(jet.phi.to_string());
            fields.push(jet.mass.to_string());
        }
        fields.push(event.weight.to_string());
        fields.push(event.channel.as_str().to_string());
        fields.push(
            match event.truth {
                Some(Truth::Background) => "bkg",
                Some(Truth::Signal) => "sig",
                None => "na",
            }
            .to_string(),
        );
        emit(&fields.join(","))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events_csv(path: &Path) -> Result<Vec<Event>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::parse(path, 1, "empty file, expected header")),
    };
    if header.trim_end() != EVENT_CSV_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("bad header, expected `{EVENT_CSV_HEADER}`"),
        ));
    }

    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(parse_event_line(path, lineno, &line)?);
    }
    Ok(events)
}

fn parse_event_line(path: &Path, lineno: usize, line: &str) -> Result<Event> {
    let fields: Vec<&str> = line.trim_end().split(',').collect();
    if fields.len() != 19 {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected 19 fields, got {}", fields.len()),
        ));
    }
    let num = |idx: usize| -> Result<f64> {
        fields[idx].parse::<f64>().map_err(|_| {
            Error::parse(path, lineno, format!("bad float in column {}: `{}`", idx + 1, fields[idx]))
        })
    };
    let mut jets = [Jet {
        pt: 0.0,
        eta: 0.0,
        phi: 0.0,
        mass: 0.0,
    }; 4];
    for (j, jet) in jets.iter_mut().enumerate() {
        let base = 4 * j;
        *jet = Jet::new(num(base)?, num(base + 1)?, num(base + 2)?, num(base + 3)?)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
    }
    let weight = num(16)?;
    let channel = match fields[17] {
        "3b" => Channel::ThreeTag,
        "4b" => Channel::FourTag,
        other => {
            return Err(Error::parse(
                path,
                lineno,
                format!("bad channel `{other}`, expected 3b or 4b"),
            ))
        }
    };
    let truth = match fields[18] {
        "bkg" => Some(Truth::Background),
        "sig" => Some(Truth::Signal),
        "na" => None,
        other => {
            return Err(Error::parse(
                path,
                lineno,
                format!("bad truth tag `{other}`, expected bkg, sig or na"),
            ))
        }
    };
    Event::new(jets, weight, channel, truth).map_err(|e| Error::parse(path, lineno, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn random_events(n: usize, seed: u64) -> Vec<Event> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let jet = |rng: &mut ChaCha12Rng| {
                    Jet::new(
                        rng.gen_range(1.0..300.0),
                        rng.gen_range(-2.5..2.5),
                        rng.gen_range(0.0..crate::event::TAU),
                        0.0,
                    )
                    .unwrap()
                };
                Event::new(
                    [jet(&mut rng), jet(&mut rng), jet(&mut rng), jet(&mut rng)],
                    rng.gen_range(0.0..3.0),
                    if i % 3 == 0 {
                        Channel::FourTag
                    } else {
                        Channel::ThreeTag
                    },
                    match i % 4 {
                        0 => Some(Truth::Background),
                        1 => Some(Truth::Signal),
                        _ => None,
                    },
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn events_round_trip_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let events = random_events(64, 5);
        write_events_csv(&path, &events).unwrap();
        let back = read_events_csv(&path).unwrap();
        assert_eq!(events, back);
        // A second write of the same data is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        write_events_csv(&path, &back).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn header_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.csv");
        write_events_csv(&path, &random_events(2, 6)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(EVENT_CSV_HEADER));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let good = "50,0,0,0,50,0,3.14,0,40,1,1,0,40,-1,2,0,1,3b,na";
        std::fs::write(
            &path,
            format!("{EVENT_CSV_HEADER}\n{good}\nnot,enough,fields\n"),
        )
        .unwrap();
        match read_events_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "pt1,eta1\n").unwrap();
        match read_events_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_channel_and_truth_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let row = "50,0,0,0,50,0,3.14,0,40,1,1,0,40,-1,2,0,1,5b,na";
        std::fs::write(&path, format!("{EVENT_CSV_HEADER}\n{row}\n")).unwrap();
        assert!(matches!(read_events_csv(&path), Err(Error::Parse { line: 2, .. })));
    }
}
