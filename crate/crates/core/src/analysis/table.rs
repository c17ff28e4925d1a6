//! Per-frame class probabilities for every test sequence.
//!
//! CSV layout: optional `# key: value` metadata lines (`model`, `seeds`,
//! `train_set`), then a header `item,rep,frame,label,snr,p0,...,p9` and one
//! row per (item, repetition, frame), ordered by item, then repetition, then
//! frame.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::data::{SnrLevel, NUM_CLASSES};
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTable {
    pub model: String,
    /// Training seeds whose predictions were pooled into this table.
    pub seeds: Vec<u64>,
    pub train_set: String,
    pub reps: usize,
    pub frames: usize,
    /// Per item.
    pub labels: Vec<usize>,
    /// Per item.
    pub snr: Vec<SnrLevel>,
    /// `[items, reps, frames, 10]`
    pub probs: Vec<f64>,
}

impl PredictionTable {
    pub fn new(
        model: impl Into<String>,
        seeds: Vec<u64>,
        train_set: impl Into<String>,
        reps: usize,
        frames: usize,
        labels: Vec<usize>,
        snr: Vec<SnrLevel>,
        probs: Vec<f64>,
    ) -> Result<Self> {
        let t = PredictionTable {
            model: model.into(),
            seeds,
            train_set: train_set.into(),
            reps,
            frames,
            labels,
            snr,
            probs,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn items(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty() || self.reps == 0 || self.frames == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr.len() != self.labels.len() {
            return Err(Error::shape(format!(
                "{} SNR tags for {} items",
                self.snr.len(),
                self.labels.len()
            )));
        }
        let want = self.items() * self.reps * self.frames * NUM_CLASSES;
        if self.probs.len() != want {
            return Err(Error::shape(format!(
                "{} probabilities for {} items x {} reps x {} frames x 10",
                self.probs.len(),
                self.items(),
                self.reps,
                self.frames
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        for (r, row) in self.probs.chunks_exact(NUM_CLASSES).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("row {r} has a probability outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {r} sums to {s}")));
            }
        }
        Ok(())
    }

    fn offset(&self, item: usize, rep: usize, frame: usize) -> usize {
        ((item * self.reps + rep) * self.frames + frame) * NUM_CLASSES
    }

    /// The 10 probabilities of one (item, repetition, frame).
    pub fn row(&self, item: usize, rep: usize, frame: usize) -> &[f64] {
        &self.probs[self.offset(item, rep, frame)..][..NUM_CLASSES]
    }

    /// All frames of one (item, repetition), `[frames, 10]`.
    pub fn sequence(&self, item: usize, rep: usize) -> &[f64] {
        &self.probs[self.offset(item, rep, 0)..][..self.frames * NUM_CLASSES]
    }

    /// Distinct SNR levels, ascending.
    pub fn snr_levels(&self) -> Vec<SnrLevel> {
        let mut v = self.snr.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Items tested at `snr`.
    pub fn select_snr(&self, snr: SnrLevel) -> PredictionTable {
        let keep: Vec<usize> = (0..self.items()).filter(|&i| self.snr[i] == snr).collect();
        self.select_items(&keep)
    }

    fn select_items(&self, keep: &[usize]) -> PredictionTable {
        let per = self.reps * self.frames * NUM_CLASSES;
        let mut probs = Vec::with_capacity(keep.len() * per);
        for &i in keep {
            probs.extend_from_slice(&self.probs[i * per..][..per]);
        }
        PredictionTable {
            model: self.model.clone(),
            seeds: self.seeds.clone(),
            train_set: self.train_set.clone(),
            reps: self.reps,
            frames: self.frames,
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            snr: keep.iter().map(|&i| self.snr[i]).collect(),
            probs,
        }
    }

    /// Concatenates the items of tables sharing repetitions and frames
    /// (e.g. the same model trained with different seeds).
    pub fn pool(tables: &[PredictionTable]) -> Result<PredictionTable> {
        let first = tables.first().ok_or_else(|| Error::invalid("no tables to pool"))?;
        let mut out = first.clone();
        for t in &tables[1..] {
            if t.reps != first.reps || t.frames != first.frames {
                return Err(Error::shape("pooled tables differ in repetitions or frames"));
            }
            out.labels.extend_from_slice(&t.labels);
            out.snr.extend_from_slice(&t.snr);
            out.probs.extend_from_slice(&t.probs);
            for &s in &t.seeds {
                if !out.seeds.contains(&s) {
                    out.seeds.push(s);
                }
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let io = |e: std::io::Error| Error::io("<prediction table>", e);
        writeln!(out, "# model: {}", self.model).map_err(io)?;
        writeln!(out, "# seeds: {}", seeds.join(",")).map_err(io)?;
        writeln!(out, "# train_set: {}", self.train_set).map_err(io)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["item".to_string(), "rep".into(), "frame".into(), "label".into(), "snr".into()];
        header.extend((0..NUM_CLASSES).map(|k| format!("p{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for item in 0..self.items() {
            for rep in 0..self.reps {
                for frame in 0..self.frames {
                    let mut rec = vec![
                        item.to_string(),
                        rep.to_string(),
                        frame.to_string(),
                        self.labels[item].to_string(),
                        self.snr[item].to_string(),
                    ];
                    rec.extend(self.row(item, rep, frame).iter().map(|p| p.to_string()));
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let mut meta = (String::new(), Vec::new(), String::new());
        let mut consumed = 0u64;
        let mut body = Vec::new();
        let mut line = String::new();
        loop {
            line.clear();
            let n = input.read_line(&mut line).map_err(|e| Error::io("<prediction table>", e))?;
            if n == 0 {
                break;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once(':').unwrap_or((rest, ""));
                let v = v.trim();
                match k.trim() {
                    "model" => meta.0 = v.to_string(),
                    "seeds" => {
                        meta.1 = v
                            .split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| s.trim().parse::<u64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::format(consumed, format!("bad seeds list {v:?}")))?;
                    }
                    "train_set" => meta.2 = v.to_string(),
                    _ => {}
                }
                consumed += n as u64;
            } else {
                body.extend_from_slice(line.as_bytes());
                input.read_to_end(&mut body).map_err(|e| Error::io("<prediction table>", e))?;
                break;
            }
        }
        let mut r = csv::Reader::from_reader(body.as_slice());
        let header = r.headers().map_err(|e| csv_format(consumed, e))?.clone();
        let mut want = vec!["item".to_string(), "rep".into(), "frame".into(), "label".into(), "snr".into()];
        want.extend((0..NUM_CLASSES).map(|k| format!("p{k}")));
        if header.iter().ne(want.iter().map(String::as_str)) {
            return Err(Error::format(consumed, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut rows: Vec<(usize, usize, usize, usize, SnrLevel, [f64; NUM_CLASSES])> = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_format(consumed, e))?;
            let at = consumed + rec.position().map_or(0, |p| p.byte());
            let bad = |m: String| Error::format(at, m);
            let int = |i: usize| rec[i].trim().parse::<usize>().map_err(|_| bad(format!("field {i} is not an index: {:?}", &rec[i])));
            let snr: SnrLevel = rec[4].parse().map_err(|e: Error| bad(e.to_string()))?;
            let mut p = [0.0; NUM_CLASSES];
            for (k, v) in p.iter_mut().enumerate() {
                *v = rec[5 + k]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("p{k} is not a number: {:?}", &rec[5 + k])))?;
            }
            rows.push((int(0)?, int(1)?, int(2)?, int(3)?, snr, p));
        }
        let items = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let reps = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let frames = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
        if rows.len() != items * reps * frames {
            return Err(Error::format(
                consumed,
                format!("{} rows do not form a full {items} x {reps} x {frames} grid", rows.len()),
            ));
        }
        let mut labels = vec![usize::MAX; items];
        let mut snr = vec![SnrLevel::whole(1); items];
        let mut probs = vec![f64::NAN; items * reps * frames * NUM_CLASSES];
        for (n, (item, rep, frame, label, level, p)) in rows.into_iter().enumerate() {
            let expected = ((item * reps + rep) * frames + frame) == n;
            if !expected {
                return Err(Error::format(consumed, format!("row {n} is out of order")));
            }
            if labels[item] != usize::MAX && (labels[item] != label || snr[item] != level) {
                return Err(Error::format(consumed, format!("item {item} changes label or SNR between rows")));
            }
            labels[item] = label;
            snr[item] = level;
            probs[n * NUM_CLASSES..][..NUM_CLASSES].copy_from_slice(&p);
        }
        PredictionTable::new(meta.0, meta.1, meta.2, reps, frames, labels, snr, probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

fn csv_format(base: u64, e: csv::Error) -> Error {
    let at = e.position().map_or(0, |p| p.byte());
    Error::format(base + at, format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> PredictionTable {
        let mut probs = Vec::new();
        for i in 0..12 {
            let mut row = [0.0; 10];
            row[i % 10] = 0.55;
            row[(i + 1) % 10] = 0.45;
            probs.extend_from_slice(&row);
        }
        PredictionTable::new(
            "grucnn",
            vec![3, 4],
            "default",
            2,
            3,
            vec![1, 7],
            vec![SnrLevel::inverse(16), SnrLevel::whole(4)],
            probs,
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("item,rep,frame,label,snr,p0,p1,p2,p3,p4,p5,p6,p7,p8,p9"));
        assert!(text.contains("1/16"));
        let back = PredictionTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.row(1, 0, 2)[8], 0.55);
        assert_eq!(t.snr_levels(), vec![SnrLevel::inverse(16), SnrLevel::whole(4)]);
        assert_eq!(t.select_snr(SnrLevel::whole(4)).labels, vec![7]);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let missing: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(PredictionTable::read_csv(missing.as_bytes()), Err(Error::Format { .. })));
        let bad = text.replacen(",0.55,", ",0.75,", 1);
        assert!(PredictionTable::read_csv(bad.as_bytes()).is_err());
        let junk = text.replacen(",0.45", ",zz", 1);
        assert!(matches!(PredictionTable::read_csv(junk.as_bytes()), Err(Error::Format { .. })));
        let mut wrong = t.clone();
        wrong.probs[0] = 0.9;
        assert!(wrong.validate().is_err());
    }

    #[test]
    fn pooling_concatenates_items() {
        let t = table();
        let mut u = t.clone();
        u.seeds = vec![4, 5];
        let p = PredictionTable::pool(&[t.clone(), u]).unwrap();
        assert_eq!(p.items(), 4);
        assert_eq!(p.seeds, vec![3, 4, 5]);
        assert_eq!(p.sequence(2, 1), t.sequence(0, 1));
    }
}
