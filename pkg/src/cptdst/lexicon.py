"""Static word inventory behind the synthetic schema-guided dialog generator.

Slot types are shared across domains so that services overlap the way real
schema-guided services do (several services ask for a city, a date, ...).
"""

SLOT_TYPES = {
    "city": {
        "names": ["city", "location", "area"],
        "descriptions": ["city where the {noun} is", "location of the {noun}", "city of the {noun}"],
        "values": ["paris", "london", "berlin", "tokyo", "rome", "madrid", "boston", "chicago", "seattle", "denver"],
        "fragments": ["in {v}", "near {v}", "somewhere in {v}"],
    },
    "date": {
        "names": ["date", "day", "start_date"],
        "descriptions": ["date of the {noun}", "day for the {noun}", "date when the {noun} starts"],
        "values": ["march 1st", "monday", "friday", "next tuesday", "june 9th", "tomorrow", "the 4th", "sunday"],
        "fragments": ["on {v}", "for {v}", "this {v}"],
    },
    "time": {
        "names": ["time", "start_time", "pickup_time"],
        "descriptions": ["time of the {noun}", "starting time for the {noun}", "time when the {noun} begins"],
        "values": ["7 pm", "10 am", "noon", "8 30 pm", "6 am", "3 pm", "midnight", "9 15 am"],
        "fragments": ["at {v}", "around {v}", "starting at {v}"],
    },
    "party_size": {
        "names": ["party_size", "number_of_people", "guests"],
        "descriptions": ["number of people for the {noun}", "how many people in the {noun}", "size of the group for the {noun}"],
        "values": ["2", "3", "4", "5", "6", "8"],
        "fragments": ["for {v} people", "with {v} people", "a group of {v}"],
    },
    "cuisine": {
        "names": ["cuisine", "food_type", "category"],
        "descriptions": ["type of food served at the {noun}", "cuisine of the {noun}", "kind of food at the {noun}"],
        "values": ["italian", "thai", "mexican", "indian", "chinese", "french", "korean"],
        "fragments": ["serving {v} food", "with {v} dishes", "that does {v}"],
    },
    "price": {
        "names": ["price_range", "budget", "cost"],
        "descriptions": ["price range of the {noun}", "budget for the {noun}", "how expensive the {noun} is"],
        "values": ["cheap", "moderate", "expensive", "pricey", "affordable"],
        "fragments": ["that is {v}", "something {v}", "a {v} option"],
    },
    "amount": {
        "names": ["amount", "payment", "total"],
        "descriptions": ["amount of money for the {noun}", "payment amount of the {noun}", "total money in the {noun}"],
        "values": ["50 dollars", "120 dollars", "300 dollars", "75 dollars", "1000 dollars", "15 dollars"],
        "fragments": ["of {v}", "paying {v}", "worth {v}"],
    },
    "person": {
        "names": ["person", "recipient", "contact_name"],
        "descriptions": ["name of the person for the {noun}", "person who receives the {noun}", "contact name on the {noun}"],
        "values": ["alice", "bob", "maria", "john", "chen", "priya", "omar"],
        "fragments": ["for my friend {v}", "under the name {v}", "with {v}"],
    },
    "rating": {
        "names": ["rating", "stars", "review_score"],
        "descriptions": ["star rating of the {noun}", "minimum rating for the {noun}", "review score of the {noun}"],
        "values": ["3 stars", "4 stars", "5 stars", "2 stars"],
        "fragments": ["rated {v}", "with at least {v}", "that has {v}"],
    },
    "genre": {
        "names": ["genre", "style", "subgenre"],
        "descriptions": ["genre of the {noun}", "style of the {noun}", "kind of {noun} genre"],
        "values": ["comedy", "drama", "horror", "jazz", "rock", "action", "pop"],
        "fragments": ["in the {v} genre", "something {v}", "a {v} one"],
    },
    "street": {
        "names": ["street", "address", "pickup_location"],
        "descriptions": ["street address of the {noun}", "address for the {noun}", "street where the {noun} is"],
        "values": ["main street", "oak avenue", "park road", "elm street", "pine lane", "river drive"],
        "fragments": ["on {v}", "at {v}", "close to {v}"],
    },
    "count": {
        "names": ["count", "number_of_items", "quantity"],
        "descriptions": ["number of items in the {noun}", "quantity for the {noun}", "how many units of the {noun}"],
        "values": ["1", "7", "9", "10", "12", "20"],
        "fragments": ["{v} of them", "a quantity of {v}", "{v} units"],
    },
    "vehicle": {
        "names": ["vehicle", "car_type", "ride_type"],
        "descriptions": ["type of vehicle for the {noun}", "car type of the {noun}", "kind of ride for the {noun}"],
        "values": ["suv", "sedan", "compact", "van", "pool", "luxury"],
        "fragments": ["using a {v}", "in a {v}", "with a {v} car"],
    },
    "account": {
        "names": ["account", "account_type", "source_account"],
        "descriptions": ["account type used for the {noun}", "which account pays the {noun}", "source account of the {noun}"],
        "values": ["checking", "savings", "credit"],
        "fragments": ["from my {v} account", "using {v}", "out of {v}"],
    },
}

DOMAINS = {
    "restaurant": {"noun": "reservation", "types": ["city", "date", "time", "party_size", "cuisine", "price", "rating", "person"],
                   "intents": ["i want to book a table", "find me a restaurant", "reserve a place to eat"]},
    "hotel": {"noun": "hotel", "types": ["city", "date", "party_size", "price", "rating", "street", "count"],
              "intents": ["i need a hotel", "book me a room", "find a place to stay"]},
    "flight": {"noun": "flight", "types": ["city", "date", "time", "party_size", "price", "amount", "person"],
               "intents": ["i want to fly", "book a flight", "find me a plane ticket"]},
    "bus": {"noun": "trip", "types": ["city", "date", "time", "party_size", "price", "street"],
            "intents": ["i need a bus", "book a bus ticket", "find me a coach"]},
    "train": {"noun": "train", "types": ["city", "date", "time", "party_size", "amount", "count"],
              "intents": ["i want a train ticket", "book the train", "find a train"]},
    "movie": {"noun": "movie", "types": ["city", "date", "time", "genre", "rating", "count", "street"],
              "intents": ["i want to see a movie", "find a film", "get movie tickets"]},
    "concert": {"noun": "event", "types": ["city", "date", "time", "genre", "party_size", "price", "amount"],
                "intents": ["find me a concert", "i want to go to a show", "book event tickets"]},
    "bank": {"noun": "transfer", "types": ["amount", "person", "account", "date", "count"],
             "intents": ["i want to make a transfer", "send some money", "move money please"]},
    "doctor": {"noun": "appointment", "types": ["city", "date", "time", "person", "rating", "street"],
               "intents": ["book a doctor visit", "i need to see a doctor", "make a medical appointment"]},
    "salon": {"noun": "appointment", "types": ["city", "date", "time", "person", "price", "rating"],
              "intents": ["i need a haircut", "book a salon", "find a stylist"]},
    "rental": {"noun": "rental car", "types": ["city", "date", "time", "vehicle", "price", "street", "amount"],
               "intents": ["i need a rental car", "rent me a car", "find a car to rent"]},
    "ride": {"noun": "ride", "types": ["street", "party_size", "vehicle", "time", "amount", "city"],
             "intents": ["get me a cab", "i need a ride", "call a taxi"]},
    "music": {"noun": "song", "types": ["genre", "person", "count", "rating", "date"],
              "intents": ["play some music", "put on a song", "i want to hear something"]},
    "apartment": {"noun": "apartment", "types": ["city", "street", "price", "count", "date", "amount"],
                  "intents": ["find an apartment", "i want to rent a flat", "look for a home"]},
    "payment": {"noun": "payment", "types": ["amount", "person", "account", "date", "time"],
                "intents": ["make a payment", "pay someone", "i want to pay a bill"]},
    "shopping": {"noun": "order", "types": ["count", "price", "amount", "street", "date", "person"],
                 "intents": ["place an order", "i want to buy something", "order some items"]},
}

SYSTEM_LINES = [
    "sure , anything else ?",
    "okay , what else do you need ?",
    "got it , any other details ?",
    "alright , tell me more .",
    "i can help with that .",
    "let me check , anything more ?",
]

USER_CLOSERS = ["please", "thanks", "if possible", "that would be great"]

MARKERS = ["user", "system", ":", ".", "?", ",", "=", ";", "is"]
