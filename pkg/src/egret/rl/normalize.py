import numpy as np


class RunningMeanStd:
    """Running mean/variance (parallel Welford) with optional freezing.

    ``center=False`` only rescales, which is what reward normalisation uses:
    subtracting a running mean from rewards would change which policy is best
    when episode lengths vary.
    """

    def __init__(self, shape=(), eps: float = 1e-8, clip: float = 10.0, center: bool = True):
        self.shape = tuple(shape)
        self.mean = np.zeros(self.shape)
        self.var = np.ones(self.shape)
        self.count = 0.0
        self.eps = eps
        self.clip = clip
        self.center = center
        self.frozen = False

    def update(self, x) -> None:
        if self.frozen:
            return
        x = np.asarray(x, dtype=np.float64).reshape((-1,) + self.shape)
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        tot = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / tot
        self.mean = self.mean + delta * n / tot
        self.var = m2 / tot
        self.count = tot

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = (x - self.mean) if self.center else x
        y = y / np.sqrt(self.var + self.eps)
        return np.clip(y, -self.clip, self.clip) if self.clip else y

    def state_dict(self) -> dict:
        return dict(shape=list(self.shape), mean=np.asarray(self.mean), var=np.asarray(self.var),
                    count=self.count, eps=self.eps, clip=self.clip, center=self.center)

    @classmethod
    def from_state(cls, st) -> "RunningMeanStd":
        r = cls(tuple(st["shape"]), st["eps"], st["clip"], st["center"])
        r.mean = np.asarray(st["mean"], dtype=np.float64).reshape(r.shape)
        r.var = np.asarray(st["var"], dtype=np.float64).reshape(r.shape)
        r.count = float(st["count"])
        return r


def normalize(stats: RunningMeanStd, value):
    return stats.normalize(value)


class ReturnScaler:
    """Scale rewards by the running spread of the discounted return.

    One running return per parallel environment; it restarts after ``done``.
    The statistics live in ``rms`` (a non-centring RunningMeanStd) so they
    are saved with the policy.
    """

    def __init__(self, rms: RunningMeanStd, n_envs: int, gamma: float):
        self.rms = rms
        self.gamma = gamma
        self.ret = np.zeros(n_envs)

    def __call__(self, rewards, dones) -> np.ndarray:
        rewards = np.asarray(rewards, dtype=np.float64)
        self.ret = self.ret * self.gamma + rewards
        self.rms.update(self.ret)
        self.ret[np.asarray(dones, dtype=bool)] = 0.0
        return self.rms.normalize(rewards)
