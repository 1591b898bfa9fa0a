use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One simulated order's lifecycle timestamps (epoch seconds, UTC).
///
/// Present timestamps are monotone:
/// `created <= accepted <= arrived_store <= picked_up <= delivered`.
/// `canceled_at` and `delivered_at` are mutually exclusive, and a delivered
/// order's duration lies in (0, 240] minutes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderEvent {
    pub order_id: u64,
    pub district_id: u64,
    pub created_at: i64,
    pub accepted_at: Option<i64>,
    pub arrived_store_at: Option<i64>,
    pub picked_up_at: Option<i64>,
    pub delivered_at: Option<i64>,
    pub canceled_at: Option<i64>,
}

/// Upper bound on delivery duration, in seconds.
pub const MAX_DURATION_S: i64 = 240 * 60;

impl OrderEvent {
    pub fn validate(&self) -> Result<()> {
        let mut last = self.created_at;
        for (name, ts) in [
            ("accepted_at", self.accepted_at),
            ("arrived_store_at", self.arrived_store_at),
            ("picked_up_at", self.picked_up_at),
            ("delivered_at", self.delivered_at),
        ] {
            if let Some(t) = ts {
                if t < last {
                    return Err(Error::Validation(format!(
                        "order {}: {name} precedes an earlier lifecycle timestamp",
                        self.order_id
                    )));
                }
                last = t;
            }
        }
        if self.canceled_at.is_some() && self.delivered_at.is_some() {
            return Err(Error::Validation(format!(
                "order {}: canceled and delivered are mutually exclusive",
                self.order_id
            )));
        }
        if let Some(d) = self.delivered_at {
            let dur = d - self.created_at;
            if dur <= 0 || dur > MAX_DURATION_S {
                return Err(Error::Validation(format!(
                    "order {}: delivery duration {dur}s outside (0, {MAX_DURATION_S}]",
                    self.order_id
                )));
            }
        }
        Ok(())
    }

    /// Delivery duration in minutes, when the order was delivered.
    pub fn duration_minutes(&self) -> Option<f64> {
        self.delivered_at
            .map(|d| (d - self.created_at) as f64 / 60.0)
    }
}

fn field(ts: Option<i64>) -> String {
    ts.map(|t| t.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, line: usize, name: &str) -> Result<Option<i64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("bad {name} '{s}'"),
    })
}

/// Writes the append-only event log: one `|`-delimited record per line with
/// empty fields for absent timestamps.
pub fn write_events(path: &Path, events: &[OrderEvent]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for e in events {
        writeln!(
            w,
            "{}|{}|{}|{}|{}|{}|{}|{}",
            e.order_id,
            e.district_id,
            e.created_at,
            field(e.accepted_at),
            field(e.arrived_store_at),
            field(e.picked_up_at),
            field(e.delivered_at),
            field(e.canceled_at),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an event log produced by [`write_events`].
pub fn read_events(path: &Path) -> Result<Vec<OrderEvent>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        events.push(OrderEvent {
            order_id: fields[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad order_id '{}'", fields[0]),
            })?,
            district_id: fields[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad district_id '{}'", fields[1]),
            })?,
            created_at: fields[2].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad created_at '{}'", fields[2]),
            })?,
            accepted_at: parse_opt(fields[3], line_no, "accepted_at")?,
            arrived_store_at: parse_opt(fields[4], line_no, "arrived_store_at")?,
            picked_up_at: parse_opt(fields[5], line_no, "picked_up_at")?,
            delivered_at: parse_opt(fields[6], line_no, "delivered_at")?,
            canceled_at: parse_opt(fields[7], line_no, "canceled_at")?,
        });
    }
    Ok(events)
}
