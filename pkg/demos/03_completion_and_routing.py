"""
Completing missing modalities and routing through experts
=========================================================

Missing blocks are generated from whatever the subject does have, then the
encoder sees a complete token grid.  Routing looks only at the observed
blocks, and each subject runs exactly k experts.
"""

import numpy as np

from cerd import SyntheticSpec, generate
from cerd.data_io import Standardizer
from cerd.model import CERDModel, desk_config
from cerd.tensor import no_grad

ds = generate(SyntheticSpec(n_subjects=200, seed=2))
model = CERDModel.for_dataset(ds.modalities, ds.dims, len(ds.classes), desk_config()).eval()
std = Standardizer.fit(ds, ds.rows("train"))

rows = np.arange(6)
batch = ds.batch(rows, std)
print("mask:\n", batch.mask.astype(int))

trace = []
with no_grad():
    out = model(batch, trace)

# provenance says where every block came from
print(out.completed.provenance)

# one generator call per (missing modality, context pattern) group
for call in trace:
    names = [[ds.modalities[j] for j in ctx] for ctx in call.context_modalities]
    print(f"generate {ds.modalities[call.target]} for rows {call.rows} from {names}")

decision = out.backbone.decision
print("gates:\n", decision.gates.data.round(3))
print("selected experts:\n", decision.selected)
print("mixing weights sum:", decision.weights.data.sum(axis=1))

# executions per expert add up to n * k
print({e: len(r) for e, r in sorted(out.backbone.dispatch.items())})
