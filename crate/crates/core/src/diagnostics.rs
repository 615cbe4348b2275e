//! Weight and prediction distances between the three networks, and the
//! per-iteration CSV metric log.

use std::io::{BufRead, Write};

use crate::autodiff::{ParamVector, Tensor4};
use crate::error::{Error, Result};
use crate::synthdata::Student;

/// Euclidean norm of `a - b` over every parameter.
pub fn weight_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_structure(b, "weight_distance")?;
    let sq: f64 = a
        .values()
        .zip(b.values())
        .map(|(x, y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// Euclidean norm of the difference of two probability maps divided by the
/// square root of the number of pixels (batch items times spatial size).
pub fn prediction_distance(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("prediction_distance", format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let [n, _, h, w] = a.dims();
    let pixels = (n * h * w).max(1) as f64;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok((sq / pixels).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistanceRecord {
    pub iter: usize,
    pub wd_t_s1: f64,
    pub wd_t_s2: f64,
    pub pd_t_s1: f64,
    pub pd_t_s2: f64,
    pub pd_s1_s2: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistanceTrace {
    pub records: Vec<DistanceRecord>,
}

pub const CSV_COLUMNS: [&str; 17] = [
    "iter", "mode", "winner", "lambda", "l_seg_s1", "l_seg_s2", "l_cps", "l_ms", "l_total_s1", "l_total_s2",
    "dice_s1", "dice_s2", "wd_t_s1", "wd_t_s2", "pd_t_s1", "pd_t_s2", "pd_s1_s2",
];

/// One row of the metric log. Values that do not apply to a mode are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub mode: String,
    pub winner: Option<Student>,
    pub lambda: f64,
    pub l_seg_s1: f64,
    pub l_seg_s2: f64,
    pub l_cps: f64,
    pub l_ms: f64,
    pub l_total_s1: f64,
    pub l_total_s2: f64,
    pub dice_s1: f64,
    pub dice_s2: f64,
    pub distances: DistanceRecord,
}

/// Nine significant digits, plain decimal where that stays short.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    }
}

impl IterationRecord {
    fn fields(&self) -> [f64; 14] {
        let d = &self.distances;
        [
            self.lambda,
            self.l_seg_s1,
            self.l_seg_s2,
            self.l_cps,
            self.l_ms,
            self.l_total_s1,
            self.l_total_s2,
            self.dice_s1,
            self.dice_s2,
            d.wd_t_s1,
            d.wd_t_s2,
            d.pd_t_s1,
            d.pd_t_s2,
            d.pd_s1_s2,
        ]
    }

    pub fn to_csv_row(&self) -> String {
        let winner = match self.winner {
            Some(Student::S1) => "s1",
            Some(Student::S2) => "s2",
            None => "none",
        };
        let mut row = format!("{},{},{}", self.iter, self.mode, winner);
        for v in self.fields() {
            row.push(',');
            row.push_str(&format_sig9(v));
        }
        row
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
        if cols.len() != CSV_COLUMNS.len() {
            return Err(Error::Argument(format!("CSV row has {} columns, expected {}", cols.len(), CSV_COLUMNS.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("column {} is not a number: {:?}", CSV_COLUMNS[i], cols[i])))
        };
        let winner = match cols[2] {
            "s1" => Some(Student::S1),
            "s2" => Some(Student::S2),
            "none" => None,
            other => return Err(Error::Argument(format!("bad winner {other:?}"))),
        };
        Ok(Self {
            iter: cols[0]
                .parse()
                .map_err(|_| Error::Argument(format!("bad iteration {:?}", cols[0])))?,
            mode: cols[1].to_string(),
            winner,
            lambda: num(3)?,
            l_seg_s1: num(4)?,
            l_seg_s2: num(5)?,
            l_cps: num(6)?,
            l_ms: num(7)?,
            l_total_s1: num(8)?,
            l_total_s2: num(9)?,
            dice_s1: num(10)?,
            dice_s2: num(11)?,
            distances: DistanceRecord {
                iter: cols[0].parse().unwrap_or(0),
                wd_t_s1: num(12)?,
                wd_t_s2: num(13)?,
                pd_t_s1: num(14)?,
                pd_t_s2: num(15)?,
                pd_s1_s2: num(16)?,
            },
        })
    }
}

/// Appends rows to a CSV sink; the header goes out on creation and the sink
/// is flushed every `flush_every` rows and on [`MetricLog::finish`].
pub struct MetricLog<W: Write> {
    sink: W,
    rows: usize,
    flush_every: usize,
}

impl<W: Write> MetricLog<W> {
    pub fn new(mut sink: W) -> Result<Self> {
        writeln!(sink, "{}", CSV_COLUMNS.join(","))?;
        Ok(Self {
            sink,
            rows: 0,
            flush_every: 50,
        })
    }

    pub fn log_iteration(&mut self, record: &IterationRecord) -> Result<()> {
        writeln!(self.sink, "{}", record.to_csv_row())?;
        self.rows += 1;
        if self.rows.is_multiple_of(self.flush_every) {
            self.sink.flush()?;
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        self.sink.flush()?;
        Ok(self.sink)
    }
}

pub fn read_log(reader: impl BufRead) -> Result<Vec<IterationRecord>> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != CSV_COLUMNS.join(",") {
        return Err(Error::Argument(format!("unexpected CSV header {header:?}")));
    }
    lines
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .map(|l| IterationRecord::from_csv_row(&l?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Segment;

    #[test]
    fn weight_distance_cases() {
        let a = ParamVector::new(vec![
            Segment::new("w", vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            Segment::new("b", vec![1], vec![0.5]).unwrap(),
        ]);
        let mut b = a.clone();
        assert_eq!(weight_distance(&a, &b).unwrap(), 0.0);
        b.segments_mut()[1].data[0] = 3.5;
        assert_eq!(weight_distance(&a, &b).unwrap(), 3.0);
        assert_eq!(weight_distance(&b, &a).unwrap(), 3.0);
        let c = ParamVector::new(vec![Segment::zeros("w", vec![3])]);
        assert!(weight_distance(&a, &c).is_err());
    }

    #[test]
    fn prediction_distance_cases() {
        let mut a = Tensor4::zeros([2, 2, 3, 3]);
        let mut b = Tensor4::zeros([2, 2, 3, 3]);
        for n in 0..2 {
            for p in 0..9 {
                a.data_mut()[n * 18 + p] = 1.0;
                b.data_mut()[n * 18 + 9 + p] = 1.0;
            }
        }
        assert_eq!(prediction_distance(&a, &a).unwrap(), 0.0);
        assert!((prediction_distance(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(prediction_distance(&a, &Tensor4::zeros([1, 2, 3, 3])).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.006737947), "0.00673794700");
        assert_eq!(format_sig9(123456.789), "123456.789");
        assert_eq!(format_sig9(1.5e-7), "1.50000000e-7");
        assert_eq!(format_sig9(f64::NAN), "NaN");
    }

    fn record(iter: usize) -> IterationRecord {
        let x = iter as f64;
        IterationRecord {
            iter,
            mode: "dcf".into(),
            winner: if iter.is_multiple_of(2) { Some(Student::S1) } else { Some(Student::S2) },
            lambda: 0.006737947 * (1.0 + x),
            l_seg_s1: 1.0 / (1.0 + x),
            l_seg_s2: std::f64::consts::PI / (2.0 + x),
            l_cps: 0.25,
            l_ms: if iter.is_multiple_of(3) { 0.0 } else { 1e-5 * x },
            l_total_s1: 12345.6789 + x,
            l_total_s2: f64::NAN,
            dice_s1: 0.5,
            dice_s2: 0.75,
            distances: DistanceRecord { iter, wd_t_s1: 3.0, wd_t_s2: 4.0, pd_t_s1: 0.1, pd_t_s2: 0.2, pd_s1_s2: 1e-9 },
        }
    }

    #[test]
    fn log_writes_header_once_and_round_trips() {
        let mut log = MetricLog::new(Vec::new()).unwrap();
        for i in 0..120 {
            log.log_iteration(&record(i)).unwrap();
        }
        assert_eq!(log.rows(), 120);
        let bytes = log.finish().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().count(), 121);
        assert_eq!(text.matches("iter,mode").count(), 1);
        assert!(!text.contains('\r'));

        let back = read_log(bytes.as_slice()).unwrap();
        for (orig, read) in (0..120).map(record).zip(&back) {
            assert_eq!(read.iter, orig.iter);
            assert_eq!(read.winner, orig.winner);
            for (a, b) in orig.fields().iter().zip(read.fields()) {
                if a.is_nan() {
                    assert!(b.is_nan());
                } else {
                    assert!((a - b).abs() <= 5e-9 * a.abs(), "{a} vs {b}");
                }
            }
        }
    }
}
