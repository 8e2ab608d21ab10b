# %% [markdown]
# # Nudging occupancy toward a target
#
# The explosion step chooses how many extra stars to place in each cell so the
# ring and slice totals land on a desired profile. Here it is on a toy 3x3 block,
# followed by the galaxy-wide target profile the full problem uses.

# %%
import numpy as np

from settlers.refine import explosion_ilp, explosion_objective
from settlers.score import target_distribution

N0 = np.array([[1, 2, 0],
               [0, 0, 3],
               [3, 1, 3]])
want_rows = np.array([8, 4, 8])
want_cols = np.array([6, 7, 8])
room = np.array([[1, 0, 0],
                 [2, 1, 1],
                 [2, 0, 0]])

# %% [markdown]
# Greedy filling plus single swaps stalls on this block. The exact mode then cancels
# negative cycles in the residual graph until none remain.

# %%
rough = explosion_ilp(N0, want_rows, want_cols, room, exact=False)
exact = explosion_ilp(N0, want_rows, want_cols, room)
print("local search :", rough.objective, "\n", rough.x)
print("exact        :", exact.objective, "\n", exact.x)
print("check        :", explosion_objective(exact.x, N0, want_rows, want_cols))

# %% [markdown]
# The galaxy-wide target for 512 stars, summed by ring and by slice.

# %%
td = target_distribution(1)
print("per ring :", td.rows)
print("per slice:", td.cols)
print("total    :", int(td.matrix.sum()))
