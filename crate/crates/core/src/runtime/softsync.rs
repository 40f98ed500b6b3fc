//! Timestamp pairing between perception frames and robot state snapshots.

use super::RuntimeError;

/// Outcome of pairing a frame with a state snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncStatus {
    Aligned,
    Rejected,
    /// No frame has been paired yet (cold start or held command).
    Stale,
}

impl SyncStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncStatus::Aligned => "Aligned",
            SyncStatus::Rejected => "Rejected",
            SyncStatus::Stale => "Stale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Aligned" => Some(SyncStatus::Aligned),
            "Rejected" => Some(SyncStatus::Rejected),
            "Stale" => Some(SyncStatus::Stale),
            _ => None,
        }
    }
}

/// A value stamped with its capture time in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestampedSample<T> {
    pub capture_us: i64,
    pub value: T,
}

/// Result of [`soft_sync`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncPair<'a, T> {
    pub state: &'a TimestampedSample<T>,
    pub delta_us: i64,
    pub status: SyncStatus,
}

/// Pairs a frame captured at `frame_us` with the nearest state snapshot.
///
/// Ties go to the earlier snapshot. The pair is `Aligned` only when the gap is
/// strictly below `eps_us`.
pub fn soft_sync<T>(
    frame_us: i64,
    states: &[TimestampedSample<T>],
    eps_us: i64,
) -> Result<SyncPair<'_, T>, RuntimeError> {
    let state = states
        .iter()
        .min_by_key(|s| ((s.capture_us - frame_us).abs(), s.capture_us))
        .ok_or(RuntimeError::EmptyBuffer)?;
    let delta_us = (state.capture_us - frame_us).abs();
    let status = if delta_us < eps_us { SyncStatus::Aligned } else { SyncStatus::Rejected };
    Ok(SyncPair { state, delta_us, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stamps(ts: &[i64]) -> Vec<TimestampedSample<usize>> {
        ts.iter().enumerate().map(|(i, &t)| TimestampedSample { capture_us: t, value: i }).collect()
    }

    #[test]
    fn picks_nearest_and_aligns() {
        let s = stamps(&[995_000, 1_003_000, 1_012_000]);
        let p = soft_sync(1_000_000, &s, 10_000).unwrap();
        assert_eq!(p.state.value, 1);
        assert_eq!(p.delta_us, 3_000);
        assert_eq!(p.status, SyncStatus::Aligned);
    }

    #[test]
    fn rejects_beyond_tolerance() {
        let s = stamps(&[1_011_000]);
        let p = soft_sync(1_000_000, &s, 10_000).unwrap();
        assert_eq!(p.status, SyncStatus::Rejected);
        let edge = stamps(&[1_010_000]);
        assert_eq!(soft_sync(1_000_000, &edge, 10_000).unwrap().status, SyncStatus::Rejected);
    }

    #[test]
    fn empty_buffer() {
        let s: Vec<TimestampedSample<()>> = Vec::new();
        assert_eq!(soft_sync(0, &s, 10).unwrap_err(), RuntimeError::EmptyBuffer);
    }

    #[test]
    fn status_names_round_trip() {
        for s in [SyncStatus::Aligned, SyncStatus::Rejected, SyncStatus::Stale] {
            assert_eq!(SyncStatus::parse(s.as_str()), Some(s));
        }
    }

    proptest! {
        #[test]
        fn aligned_iff_within_eps(frame in -1_000_000i64..1_000_000, ts in prop::collection::vec(-1_000_000i64..1_000_000, 1..20), eps in 1i64..100_000) {
            let s = stamps(&ts);
            let p = soft_sync(frame, &s, eps).unwrap();
            let best = ts.iter().map(|t| (t - frame).abs()).min().unwrap();
            prop_assert_eq!(p.delta_us, best);
            prop_assert_eq!(p.status == SyncStatus::Aligned, best < eps);
        }
    }
}
