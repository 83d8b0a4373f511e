import express, { Express, Request, Response } from "express";

export interface Owner {
  first: string;
  last: string;
}

function layout(title: string, body: string): string {
  // No timestamps or per-request values: bodies must be byte-stable.
  return [
    "<!doctype html>",
    "<html>",
    `<head><title>${title}</title></head>`,
    "<body>",
    body,
    "</body>",
    "</html>",
    "",
  ].join("\n");
}

function ownersList(owners: Owner[]): string {
  const rows = owners
    .map(
      (o, i) =>
        `<li>${o.first} ${o.last} ` +
        `<a id="delete-${i}" href="/owners/${i}/delete">delete</a></li>`
    )
    .join("\n");
  return layout(
    "Owners",
    [
      "<h1>Owner list</h1>",
      `<ul id="owners">`,
      rows,
      "</ul>",
      '<a id="add-more" href="/owners/new">Add owner</a>',
      '<a id="back-home" href="/">Home</a>',
    ].join("\n")
  );
}

const HOME = layout(
  "Pet Owners Fixture",
  [
    "<h1>Pet owners</h1>",
    "<nav>",
    '<a id="nav-owners" href="/owners">Owners</a>',
    '<a id="nav-add" href="/owners/new">Add owner</a>',
    '<a id="nav-health" href="/boom">Service health</a>',
    '<a id="nav-partner" href="http://partner.invalid/promo">Partner site</a>',
    "</nav>",
    // Planted console exception: clicking throws, uncaught.
    "<button id=\"crash\" onclick=\"throw new Error('fixture-planted: crash button clicked')\">Diagnostics</button>",
    // Not rendered: must never appear in any extracted action set.
    '<button id="ghost" style="display:none">Hidden</button>',
  ].join("\n")
);

const ADD_FORM = layout(
  "Add owner",
  [
    "<h1>Add owner</h1>",
    '<form method="post" action="/owners">',
    '<label>First name <input id="first-name" name="first" type="text" maxlength="40"></label>',
    '<label>Last name <input id="last-name" name="last" type="text" maxlength="40"></label>',
    '<button id="submit-owner" type="submit">Add owner</button>',
    "</form>",
    '<a id="cancel" href="/owners">Cancel</a>',
  ].join("\n")
);

const BAD_REQUEST = layout(
  "Invalid owner",
  [
    "<h1>Invalid owner</h1>",
    "<p>Both names are required.</p>",
    '<a id="back-form" href="/owners/new">Back</a>',
  ].join("\n")
);

export function createApp(): Express {
  const app = express();
  const owners: Owner[] = [];
  app.use(express.urlencoded({ extended: false }));

  app.get("/", (_req: Request, res: Response) => {
    res.type("html").send(HOME);
  });

  app.get("/owners", (_req: Request, res: Response) => {
    res.type("html").send(ownersList(owners));
  });

  app.get("/owners/new", (_req: Request, res: Response) => {
    res.type("html").send(ADD_FORM);
  });

  app.post("/owners", (req: Request, res: Response) => {
    const first = String(req.body?.first ?? "").trim();
    const last = String(req.body?.last ?? "").trim();
    if (!first || !last) {
      // The one planted client error: submitting an incomplete form.
      res.status(400).type("html").send(BAD_REQUEST);
      return;
    }
    owners.push({ first, last });
    res.redirect(303, "/owners");
  });

  app.get("/owners/:index/delete", (req: Request, res: Response) => {
    const index = Number(req.params.index);
    if (Number.isInteger(index) && index >= 0 && index < owners.length) {
      owners.splice(index, 1);
    }
    res.redirect(303, "/owners");
  });

  app.get("/boom", (_req: Request, res: Response) => {
    // The one planted server error.
    res.status(500).type("html").send(layout("Boom", "<h1>internal diagnostics failure</h1>"));
  });

  return app;
}
