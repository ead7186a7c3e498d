import logging
from aiohttp import web

from database.bm25_index import tokenize

routes = web.RouteTableDef()
logger = logging.getLogger(__name__)

MAX_K = 1000


# ─────────────────────────────────────────────
# 🏠 HEALTH
# ─────────────────────────────────────────────
@routes.get("/", allow_head=True)
async def root_route_handler(request):
    index = request.app["index"]
    return web.json_response({
        "status": "ok",
        "doc_count": index.doc_count,
        "k1": index.k1,
        "b": index.b,
    })


# ─────────────────────────────────────────────
# 🔍 RETRIEVE
# ─────────────────────────────────────────────
@routes.post("/retrieve")
async def retrieve_route_handler(request):
    try:
        body = await request.json()
    except ValueError:
        raise web.HTTPBadRequest(text="body must be JSON")
    query = body.get("query") if isinstance(body, dict) else None
    k = body.get("k", 5) if isinstance(body, dict) else None
    if not isinstance(query, str) or not isinstance(k, int) or not 1 <= k <= MAX_K:
        raise web.HTTPBadRequest(text="expected {\"query\": string, \"k\": int >= 1}")

    index = request.app["index"]
    documents = []
    if tokenize(query):
        for internal_id, score in index.search(query, k):
            doc = index.corpus.documents[internal_id]
            documents.append({"doc_id": doc.doc_id, "title": doc.title, "text": doc.text, "score": score})
    return web.json_response({"documents": documents})
