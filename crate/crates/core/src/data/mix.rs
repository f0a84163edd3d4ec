use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One step of a mixed stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mixed<T> {
    Task(T),
    Regularizer(T),
}

impl<T> Mixed<T> {
    pub fn is_regularizer(&self) -> bool {
        matches!(self, Mixed::Regularizer(_))
    }

    pub fn into_inner(self) -> T {
        match self {
            Mixed::Task(t) | Mixed::Regularizer(t) => t,
        }
    }
}

/// Interleaves a regularizer stream into a task stream.
///
/// At each step a regularizer batch is emitted with probability
/// `mix_ratio`, otherwise the next task batch. The regularizer stream is
/// cycled; the result ends when the task stream is exhausted.
pub fn mix_streams<T: Clone>(
    task: Vec<T>,
    regularizer: Vec<T>,
    mix_ratio: f64,
    seed: u64,
) -> Result<Vec<Mixed<T>>> {
    if !(0.0..1.0).contains(&mix_ratio) {
        return Err(Error::Config(format!(
            "mix_ratio {mix_ratio} is outside [0, 1)"
        )));
    }
    if task.is_empty() {
        return Err(Error::Data("task stream is empty".into()));
    }
    if mix_ratio > 0.0 && regularizer.is_empty() {
        return Err(Error::Data("regularizer stream is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(task.len());
    let mut reg = regularizer.iter().cycle();
    let mut task = task.into_iter().peekable();
    while task.peek().is_some() {
        if mix_ratio > 0.0 && rng.random::<f64>() < mix_ratio {
            out.push(Mixed::Regularizer(reg.next().expect("non-empty").clone()));
        } else {
            out.push(Mixed::Task(task.next().expect("peeked")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ratio_is_the_task_stream() {
        let m = mix_streams(vec![1, 2, 3], vec![], 0.0, 1).unwrap();
        assert_eq!(m, vec![Mixed::Task(1), Mixed::Task(2), Mixed::Task(3)]);
    }

    #[test]
    fn half_ratio_frequency() {
        let task: Vec<u32> = (0..5000).collect();
        let m = mix_streams(task, vec![7, 8], 0.5, 42).unwrap();
        let reg = m.iter().filter(|x| x.is_regularizer()).count();
        assert!(m.len() >= 10_000 - 200, "{}", m.len());
        let frac = reg as f64 / m.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn same_seed_same_interleaving() {
        let a = mix_streams((0..100).collect(), vec![0], 0.3, 5).unwrap();
        let b = mix_streams((0..100).collect(), vec![0], 0.3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_streams_are_errors() {
        assert!(matches!(
            mix_streams(Vec::<u8>::new(), vec![1], 0.1, 0),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            mix_streams(vec![1], vec![], 0.1, 0),
            Err(Error::Data(_))
        ));
        assert!(mix_streams(vec![1], vec![1], 1.0, 0).is_err());
    }
}
