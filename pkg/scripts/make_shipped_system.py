"""Write systems/paper_numerical.json (the shipped 3-stage numerical system).

Stage 0 sensor matrix C0 is not published; it is drawn from a standard
Gaussian with the recorded seed so the file is reproducible.
"""
import argparse
from pathlib import Path

import numpy as np

from mms_glhad.model import StageModel, SystemModel, save_system

A1 = [[0.98451502, 0.10019498, 0.71348497],
      [0.14298264, 0.6412398, 0.90647641],
      [0.58426722, 0.35536841, 0.47612775]]
B1 = [[0.44096615, 0.65555366, 0.94144979],
      [0.78338986, 0.9915377, 0.04527771],
      [0.65264265, 0.71571167, 0.04051945]]
C1 = [[0.253187, 0.05120722, 0.11092476],
      [0.29308483, 0.25376252, 0.27890331],
      [0.75454911, 0.69534419, 0.84689801],
      [0.67852479, 0.94239412, 0.47245499],
      [0.45955921, 0.70151646, 0.8589794]]
A2 = [[0.32555806, 0.69552568, 0.4198415],
      [0.15818161, 0.98608914, 0.17239575],
      [0.08682796, 0.46574264, 0.64864652]]
B2 = [[0.10907593, 0.92440577, 0.2639907],
      [0.13940577, 0.0693751, 0.07336545],
      [0.91392411, 0.00977986, 0.70578249]]
C2 = [[0.11854015, 0.82173999, 0.36687075],
      [0.53914991, 0.06616444, 0.0640871],
      [0.2704268, 0.98044219, 0.05198996],
      [0.8653151, 0.23836825, 0.53458056],
      [0.2535729, 0.24849771, 0.15870048]]
A3 = [[0.2825282, 0.03752622, 0.54049816],
      [0.72578386, 0.68528011, 0.71830077],
      [0.64645617, 0.89273244, 0.543886]]
B3 = [[0.7053606, 0.15796312, 0.3572694],
      [0.72379339, 0.16706866, 0.50119868],
      [0.66340254, 0.80151632, 0.24965837]]
C3 = [[0.43486379, 0.02126384, 0.69090388],
      [0.09041975, 0.74105159, 0.35007977],
      [0.76560823, 0.96178511, 0.02544355],
      [0.41486178, 0.55222053, 0.89840115],
      [0.14928482, 0.54467456, 0.23947464]]

X0 = [1.0, 1.0, 1.0]
REFS = [[-1.147, -0.726, -0.466], [0.239, -0.702, 0.873], [0.108, -0.124, -0.140]]
C0_SEED = 2024


def shipped_system(seed: int = C0_SEED) -> SystemModel:
    W = 0.1 * np.eye(3)
    V = 0.1 * np.eye(5)
    C0 = np.random.default_rng(seed).standard_normal((5, 3))
    stages = [StageModel(k=0, C=C0, V=V.copy())]
    for k, (A, B, C) in enumerate([(A1, B1, C1), (A2, B2, C2), (A3, B3, C3)], start=1):
        stages.append(StageModel(k=k, A=np.array(A), B=np.array(B), C=np.array(C), W=W.copy(), V=V.copy()))
    return SystemModel(
        stages=tuple(stages), x0=np.array(X0), refs=tuple(np.array(r) for r in REFS),
        U=np.eye(3), Z=np.eye(3), F=np.eye(3), prior_cov=np.eye(3), noise_seed=seed,
        description=(f"Published 3-stage numerical system. C0 ~ N(0,1) entries drawn with "
                     f"numpy default_rng({seed}); V0 = 0.1 I5; LQG weights U = Z = F = I3; prior_cov = I3."),
    )


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "systems" / "paper_numerical.json"))
    ap.add_argument("--seed", type=int, default=C0_SEED)
    args = ap.parse_args()
    save_system(shipped_system(args.seed), args.out)
    print(f"wrote {args.out}")
