use tivode::error::{Error, Result};
use tivode::odesolve::TimeGrid;

/// `fps:<n>` expands to the `n + 1` times `i / n`; anything else is a comma
/// list of strictly increasing times in `[0, 1]`.
pub fn parse_times(spec: &str) -> Result<TimeGrid> {
    let spec = spec.trim();
    if let Some(n) = spec.strip_prefix("fps:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Input(format!("bad frame count in {spec:?}")))?;
        if n == 0 {
            return Err(Error::Input("fps:<n> needs n >= 1".into()));
        }
        return TimeGrid::uniform(n + 1);
    }
    let times = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("bad time {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    TimeGrid::new(times)
}

/// File name of the frame at time `t`.
pub fn frame_name(t: f64) -> String {
    format!("frame_{t:.4}.pgm")
}
