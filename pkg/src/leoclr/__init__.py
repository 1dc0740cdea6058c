"""Contrastive pretraining that attracts random crops to the uncropped original image.

Instead of pulling two random crops toward each other (which can align
semantically unrelated regions), the query encoder sees the whole resized
image while a momentum encoder sees the two crops; both crops are attracted
to the original under an InfoNCE objective with a FIFO negative queue.
"""

__version__ = "0.1.0"
